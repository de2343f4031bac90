//! Synthetic Gaussian-blob datasets, covariate shift, and stream ordering.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attempts per cluster center before giving up on placement.
const MAX_CENTER_RETRIES: usize = 10_000;

/// Ground-truth or predicted class. All novel classes collapse into `Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Known(usize),
    Unknown,
}

impl ClassLabel {
    /// Position in a `(num_known + 1)`-way output; `Unknown` is the last slot.
    pub fn index(self, num_known: usize) -> usize {
        match self {
            ClassLabel::Known(k) => k,
            ClassLabel::Unknown => num_known,
        }
    }

    pub fn from_index(index: usize, num_known: usize) -> Self {
        if index >= num_known {
            ClassLabel::Unknown
        } else {
            ClassLabel::Known(index)
        }
    }

    pub fn is_unknown(self) -> bool {
        matches!(self, ClassLabel::Unknown)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Known(k) => write!(f, "{k}"),
            ClassLabel::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "unknown" {
            return Ok(ClassLabel::Unknown);
        }
        s.parse::<usize>()
            .map(ClassLabel::Known)
            .map_err(|_| Error::parse("label", format!("expected an index or `unknown`, got `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: ClassLabel,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: ClassLabel) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub num_known: usize,
    pub num_unknown_clusters: usize,
    pub dim: usize,
    pub samples_per_cluster: usize,
    pub cluster_std: f64,
    pub center_box: (f64, f64),
    pub seed: u64,
}

impl Default for BlobSpec {
    /// Three known blobs and one unknown blob in the plane.
    fn default() -> Self {
        Self {
            num_known: 3,
            num_unknown_clusters: 1,
            dim: 2,
            samples_per_cluster: 100,
            cluster_std: 1.0,
            center_box: (-10.0, 10.0),
            seed: 7,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("blob spec: {m}")));
        if self.num_known < 2 {
            return bad("num_known must be at least 2");
        }
        if self.num_unknown_clusters < 1 {
            return bad("num_unknown_clusters must be at least 1");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.samples_per_cluster < 1 {
            return bad("samples_per_cluster must be at least 1");
        }
        if self.cluster_std <= 0.0 || !self.cluster_std.is_finite() {
            return bad("cluster_std must be positive");
        }
        let (lo, hi) = self.center_box;
        if lo >= hi || !lo.is_finite() || !hi.is_finite() {
            return bad("center_box must satisfy low < high");
        }
        Ok(())
    }

    pub fn num_clusters(&self) -> usize {
        self.num_known + self.num_unknown_clusters
    }
}

/// Covariate shift applied to a target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Radians, applied in the plane of the first two features.
    pub rotation_angle: f64,
    /// Empty means no translation.
    pub translation: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            rotation_angle: 0.0,
            translation: Vec::new(),
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.translation.is_empty() && self.translation.len() != dim {
            return Err(Error::InvalidConfig(format!(
                "shift translation has {} entries but data has {dim} dimensions",
                self.translation.len()
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::InvalidConfig("shift noise_std must be >= 0".into()));
        }
        if !self.rotation_angle.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("shift parameters must be finite".into()));
        }
        Ok(())
    }
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

/// Cluster centers and the train/test split drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobData {
    /// Known centers first, then the unknown clusters.
    pub centers: Vec<Vec<f64>>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Draws isotropic Gaussian blobs.
///
/// The training split holds only known-class samples. The test split is an
/// independent draw of every cluster, unknown clusters included.
pub fn generate_blobs(spec: &BlobSpec) -> Result<BlobData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = place_centers(spec, &mut rng)?;
    let noise = Normal::new(0.0, spec.cluster_std).expect("validated std");

    let draw = |known_only: bool, rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            let label = ClassLabel::from_index(c, spec.num_known);
            if known_only && label.is_unknown() {
                continue;
            }
            for _ in 0..spec.samples_per_cluster {
                let features = center.iter().map(|m| m + noise.sample(rng)).collect();
                out.push(Sample::new(features, label));
            }
        }
        out
    };
    let train = draw(true, &mut rng);
    let test = draw(false, &mut rng);
    Ok(BlobData {
        centers,
        train,
        test,
    })
}

fn place_centers(spec: &BlobSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let (lo, hi) = spec.center_box;
    let min_dist = 2.0 * spec.cluster_std;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_clusters());
    for _ in 0..spec.num_clusters() {
        let mut placed = false;
        for _ in 0..MAX_CENTER_RETRIES {
            let candidate: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(lo..hi)).collect();
            let separated = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= min_dist
            });
            if separated {
                centers.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::CenterPlacement {
                clusters: spec.num_clusters(),
                retries: MAX_CENTER_RETRIES,
            });
        }
    }
    Ok(centers)
}

/// Rotation, then translation, then additive Gaussian noise.
pub fn apply_shift(dataset: &[Sample], shift: &ShiftSpec) -> Result<Vec<Sample>> {
    let Some(first) = dataset.first() else {
        return Err(Error::InvalidConfig("cannot shift an empty dataset".into()));
    };
    let dim = first.features.len();
    shift.validate(dim)?;
    let noise = Normal::new(0.0, shift.noise_std).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    let (sin, cos) = shift.rotation_angle.sin_cos();

    dataset
        .iter()
        .map(|s| {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            let mut f = s.features.clone();
            if shift.rotation_angle != 0.0 && dim >= 2 {
                let (x, y) = (f[0], f[1]);
                f[0] = cos * x - sin * y;
                f[1] = sin * x + cos * y;
            }
            for (v, t) in f.iter_mut().zip(&shift.translation) {
                *v += t;
            }
            if shift.noise_std > 0.0 {
                for v in &mut f {
                    *v += noise.sample(&mut rng);
                }
            }
            Ok(Sample::new(f, s.label))
        })
        .collect()
}

/// A seeded permutation of `dataset`, to be consumed once in order.
pub fn make_stream(dataset: &[Sample], order_seed: u64) -> Vec<Sample> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    order.into_iter().map(|i| dataset[i].clone()).collect()
}

/// Writes `f0,...,f{d-1},label`.
pub fn write_csv(path: &Path, dataset: &[Sample]) -> Result<()> {
    let dim = dataset.first().map_or(0, |s| s.features.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in dataset {
        let mut row: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
        row.push(s.label.to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let dim = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..dim)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::parse(path.display().to_string(), "unexpected dataset header"));
    }
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let features = record
            .iter()
            .take(dim)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = record[dim].parse()?;
        out.push(Sample::new(features, label));
    }
    Ok(out)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::parse(path.display().to_string(), e.to_string())
}
