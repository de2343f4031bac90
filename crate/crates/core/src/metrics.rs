//! Known/unknown accuracy, H-score, confusion matrices and decision grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{csv_err, ClassLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Macro-averaged recall over known classes present in the truths.
    pub acc_k: Option<f64>,
    pub acc_u: Option<f64>,
    /// Absent unless both accuracies are defined.
    pub hs: Option<f64>,
    /// Recall per class, unknown last; absent for classes without samples.
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`, unknown as the last index.
    pub confusion: Vec<Vec<usize>>,
}

/// Harmonic mean of known and unknown accuracy; zero when either is zero.
pub fn h_score(acc_k: f64, acc_u: f64) -> f64 {
    if acc_k + acc_u == 0.0 {
        return 0.0;
    }
    2.0 * acc_k * acc_u / (acc_k + acc_u)
}

pub fn evaluate(predictions: &[ClassLabel], truths: &[ClassLabel], num_known: usize) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: predictions.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty prediction set".into()));
    }
    let classes = num_known + 1;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (p, t) in predictions.iter().zip(truths) {
        let (pi, ti) = (p.index(num_known), t.index(num_known));
        if pi >= classes || ti >= classes {
            return Err(Error::LabelOutOfRange {
                label: pi.max(ti),
                num_known,
            });
        }
        confusion[ti][pi] += 1;
    }
    let per_class_recall: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    let known: Vec<f64> = per_class_recall[..num_known].iter().flatten().copied().collect();
    let acc_k = (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64);
    let acc_u = per_class_recall[num_known];
    let hs = acc_k.zip(acc_u).map(|(k, u)| h_score(k, u));
    Ok(EvalReport {
        n: truths.len(),
        acc_k,
        acc_u,
        hs,
        per_class_recall,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub label: ClassLabel,
}

/// Labels a `resolution x resolution` lattice over a 2-D box, row-major with
/// `y` outer and `x` inner.
pub fn decision_grid<F>(
    input_dim: usize,
    bbox: [(f64, f64); 2],
    resolution: usize,
    mut predict: F,
) -> Result<Vec<GridPoint>>
where
    F: FnMut(&[f64]) -> Result<ClassLabel>,
{
    if input_dim != 2 {
        return Err(Error::InvalidConfig(format!(
            "decision grids need a 2-D input space, model has {input_dim}"
        )));
    }
    if resolution < 2 {
        return Err(Error::InvalidConfig("grid resolution must be at least 2".into()));
    }
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        let step = (hi - lo) / (resolution - 1) as f64;
        (0..resolution)
            .map(|i| if i == resolution - 1 { hi } else { lo + step * i as f64 })
            .collect()
    };
    let (xs, ys) = (axis(bbox[0]), axis(bbox[1]));
    let mut grid = Vec::with_capacity(resolution * resolution);
    for &y in &ys {
        for &x in &xs {
            grid.push(GridPoint {
                x,
                y,
                label: predict(&[x, y])?,
            });
        }
    }
    Ok(grid)
}

/// Writes `x,y,label`.
pub fn write_grid_csv(path: &Path, grid: &[GridPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["x", "y", "label"]).map_err(|e| csv_err(path, e))?;
    for g in grid {
        w.write_record([g.x.to_string(), g.y.to_string(), g.label.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
