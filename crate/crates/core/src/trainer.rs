//! Mini-batch momentum SGD over the source set, and extraction of the frozen
//! source embedding bank.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{csv_err, ClassLabel, Sample};
use crate::error::{Error, Result};
use crate::losses::{ugd_loss, LossConfig};
use crate::model::{Gradients, ModelParams};
use crate::numeric;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub shuffle_seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            shuffle_seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-sample loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Mean loss and mean parameter gradient over `batch`.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&Sample],
    loss: &LossConfig,
) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros_like(params);
    let mut value = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let y = known_label(sample, params.num_known)?;
        let trace = params.forward(&sample.features)?;
        let l = ugd_loss(&trace.logits, y, loss)?;
        value += l.value * scale;
        let g = params.backward(&trace, &l.grad)?;
        total.add_scaled(&g, scale);
    }
    Ok((value, total))
}

fn known_label(sample: &Sample, num_known: usize) -> Result<usize> {
    match sample.label {
        ClassLabel::Known(k) if k < num_known => Ok(k),
        ClassLabel::Known(k) => Err(Error::LabelOutOfRange { label: k, num_known }),
        ClassLabel::Unknown => Err(Error::InvalidConfig(
            "training data must contain only known-class samples".into(),
        )),
    }
}

/// Heavy-ball momentum: `v <- m * v + grad`, `param <- param - lr * v`.
pub struct MomentumSgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Gradients,
}

impl MomentumSgd {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Gradients::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &Gradients) {
        let (lr, m) = (self.learning_rate, self.momentum);
        let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = m * *v + g;
                *p -= lr * *v;
            }
        };
        for ((layer, (vw, vb)), (gw, gb)) in params
            .layers
            .iter_mut()
            .zip(self.velocity.layers.iter_mut())
            .zip(&grad.layers)
        {
            update(&mut layer.weights, vw, gw);
            update(&mut layer.bias, vb, gb);
        }
        update(&mut params.head, &mut self.velocity.head, &grad.head);
    }
}

pub fn train(params: &ModelParams, train_set: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = params.clone();
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut opt = MomentumSgd::new(&params, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = batch_gradient(&params, &batch, &config.loss)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            opt.step(&mut params, &grad);
        }
        loss_history.push(epoch_loss / train_set.len() as f64);
        log::debug!("epoch {epoch}: loss {:.6}", loss_history[epoch]);
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            batch: 0,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome {
        params,
        loss_history,
    })
}

/// Frozen, unit-norm source embeddings plus one prototype per known class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    prototypes: Vec<Vec<f64>>,
}

impl EmbeddingBank {
    /// Normalizes each embedding and averages per class.
    pub fn from_embeddings(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, num_known: usize) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyBank);
        }
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.len(),
                got: labels.len(),
            });
        }
        let dim = embeddings[0].len();
        let embeddings = embeddings
            .iter()
            .map(|e| {
                if e.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: e.len(),
                    });
                }
                numeric::l2_normalize(e)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_known) {
            return Err(Error::LabelOutOfRange { label: bad, num_known });
        }
        let prototypes = (0..num_known)
            .map(|k| {
                let members: Vec<&[f64]> = embeddings
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == k)
                    .map(|(e, _)| e.as_slice())
                    .collect();
                if members.is_empty() {
                    return Err(Error::MissingClass(k));
                }
                numeric::normalized_mean(members, dim).map_err(|_| Error::DegeneratePrototype(k))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embeddings,
            labels,
            prototypes,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn num_known(&self) -> usize {
        self.prototypes.len()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    /// Prototype sidecar path for a bank file: `x.csv` -> `x.prototypes.csv`.
    pub fn prototype_path(bank_path: &Path) -> PathBuf {
        bank_path.with_extension("prototypes.csv")
    }

    /// Writes `z0..z{d-1},label` rows plus a `class,z0..z{d-1}` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self.dim();
        let zs: Vec<String> = (0..dim).map(|i| format!("z{i}")).collect();

        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = zs.clone();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (e, l) in self.embeddings.iter().zip(&self.labels) {
            let mut row: Vec<String> = e.iter().map(f64::to_string).collect();
            row.push(l.to_string());
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let ppath = Self::prototype_path(path);
        let mut w = csv::Writer::from_path(&ppath).map_err(|e| csv_err(&ppath, e))?;
        let mut header = vec!["class".to_string()];
        header.extend(zs);
        w.write_record(&header).map_err(|e| csv_err(&ppath, e))?;
        for (k, p) in self.prototypes.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(p.iter().map(f64::to_string));
            w.write_record(&row).map_err(|e| csv_err(&ppath, e))?;
        }
        w.flush().map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows = read_numeric_csv(path)?;
        let mut embeddings = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for mut row in rows {
            let label = row.pop().ok_or_else(|| Error::parse(path.display().to_string(), "empty row"))?;
            labels.push(as_index(label, path)?);
            embeddings.push(row);
        }
        let ppath = Self::prototype_path(path);
        let mut prototypes = Vec::new();
        for (k, row) in read_numeric_csv(&ppath)?.into_iter().enumerate() {
            if row.is_empty() || as_index(row[0], &ppath)? != k {
                return Err(Error::parse(ppath.display().to_string(), "prototype rows out of order"));
            }
            prototypes.push(row[1..].to_vec());
        }
        let bank = Self {
            embeddings,
            labels,
            prototypes,
        };
        bank.check_loaded(path)?;
        Ok(bank)
    }

    fn check_loaded(&self, path: &Path) -> Result<()> {
        let bad = |m: &str| Err(Error::parse(path.display().to_string(), m.to_string()));
        if self.embeddings.is_empty() {
            return Err(Error::EmptyBank);
        }
        let dim = self.dim();
        let unit = |v: &Vec<f64>| v.len() == dim && (numeric::norm(v) - 1.0).abs() < 1e-9;
        if !self.embeddings.iter().all(unit) || !self.prototypes.iter().all(unit) {
            return bad("bank vectors must be unit norm with consistent dimension");
        }
        if self.labels.iter().any(|&l| l >= self.prototypes.len()) {
            return bad("bank label without prototype");
        }
        Ok(())
    }
}

fn as_index(v: f64, path: &Path) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::parse(path.display().to_string(), format!("expected class index, got {v}")))
    }
}

fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            rec.iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
                })
                .collect()
        })
        .collect()
}

/// Embeds every training sample in input order.
pub fn extract_bank(params: &ModelParams, train_set: &[Sample]) -> Result<EmbeddingBank> {
    let mut embeddings = Vec::with_capacity(train_set.len());
    let mut labels = Vec::with_capacity(train_set.len());
    for s in train_set {
        labels.push(known_label(s, params.num_known)?);
        let trace = params.forward(&s.features)?;
        embeddings.push(trace.normalized()?.to_vec());
    }
    EmbeddingBank::from_embeddings(embeddings, labels, params.num_known)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobSpec};

    fn tiny_set() -> Vec<Sample> {
        generate_blobs(&BlobSpec {
            samples_per_cluster: 10,
            ..BlobSpec::default()
        })
        .unwrap()
        .train
    }

    #[test]
    fn zero_epochs_is_identity() {
        let p = ModelParams::init(2, 8, 3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&p, &tiny_set(), &cfg).unwrap();
        assert_eq!(out.params.to_bytes(), p.to_bytes());
        assert!(out.loss_history.is_empty());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let p = ModelParams::init(2, 8, 3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&p, &tiny_set(), &cfg).unwrap();
        assert_eq!(out.params.to_bytes(), p.to_bytes());
        assert_eq!(out.loss_history.len(), 3);
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let mut p = ModelParams::init(2, 8, 3, 1).unwrap();
        let set = tiny_set();
        let batch: Vec<&Sample> = set.iter().take(5).collect();
        let (_, g) = batch_gradient(&p, &batch, &LossConfig::default()).unwrap();
        let before = p.flatten();
        let mut opt = MomentumSgd::new(&p, 0.1, 0.0);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        for ((a, b), g) in p.flatten().iter().zip(&before).zip(g.flatten()) {
            assert_eq!(*a, (b - 0.1 * g) - 0.1 * g);
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_unknowns() {
        let p = ModelParams::init(2, 8, 3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let set = tiny_set();
        assert_eq!(train(&p, &set, &cfg).unwrap(), train(&p, &set, &cfg).unwrap());

        let mut bad = set.clone();
        bad.push(Sample::new(vec![0.0, 0.0], ClassLabel::Unknown));
        assert!(train(&p, &bad, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let p = ModelParams::init(2, 8, 3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut set = tiny_set();
        set[0].features[0] = f64::NAN;
        assert!(matches!(train(&p, &set, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bank_one_per_class() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 0.0]];
        let bank = EmbeddingBank::from_embeddings(e, vec![0, 1, 2], 3).unwrap();
        assert_eq!(bank.prototypes()[1], vec![0.0, 1.0]);
        assert_eq!(bank.prototypes()[2], vec![-1.0, 0.0]);
        for (p, e) in bank.prototypes().iter().zip(bank.embeddings()) {
            assert_eq!(p, e);
        }
    }

    #[test]
    fn bank_duplicates_keep_prototype() {
        let base = vec![vec![1.0, 0.2], vec![0.0, 1.0]];
        let a = EmbeddingBank::from_embeddings(base.clone(), vec![0, 1], 2).unwrap();
        let mut dup = base;
        dup.push(vec![1.0, 0.2]);
        let b = EmbeddingBank::from_embeddings(dup, vec![0, 1, 0], 2).unwrap();
        assert_eq!(b.len(), 3);
        for (x, y) in a.prototypes()[0].iter().zip(&b.prototypes()[0]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn bank_errors() {
        let e = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            EmbeddingBank::from_embeddings(e, vec![0, 0, 1], 2),
            Err(Error::DegeneratePrototype(0))
        ));
        let e = vec![vec![1.0, 0.0]];
        assert!(matches!(
            EmbeddingBank::from_embeddings(e, vec![0], 2),
            Err(Error::MissingClass(1))
        ));
        assert!(matches!(
            EmbeddingBank::from_embeddings(vec![], vec![], 2),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn extracted_bank_is_unit_and_ordered() {
        let p = ModelParams::init(2, 8, 3, 2).unwrap();
        let set = tiny_set();
        let bank = extract_bank(&p, &set).unwrap();
        assert_eq!(bank.len(), set.len());
        for (i, s) in set.iter().enumerate() {
            assert_eq!(ClassLabel::Known(bank.labels()[i]), s.label);
            assert!((numeric::norm(bank.embedding(i)) - 1.0).abs() < 1e-9);
        }
        for (k, proto) in bank.prototypes().iter().enumerate() {
            assert!((numeric::norm(proto) - 1.0).abs() < 1e-9);
            let mut mean = vec![0.0; bank.dim()];
            for (e, &l) in bank.embeddings().iter().zip(bank.labels()) {
                if l == k {
                    mean.iter_mut().zip(e).for_each(|(m, x)| *m += x);
                }
            }
            let sim = numeric::cosine_similarity(proto, &mean).unwrap();
            assert!((sim - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bank_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.csv");
        let p = ModelParams::init(2, 4, 3, 2).unwrap();
        let bank = extract_bank(&p, &tiny_set()).unwrap();
        bank.save(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("z0,z1,z2,z3,label\n"));
        assert!(EmbeddingBank::prototype_path(&path).exists());
        assert_eq!(EmbeddingBank::load(&path).unwrap(), bank);
    }
}
