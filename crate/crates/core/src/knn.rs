//! Exact cosine K-nearest-neighbor search over the source embedding bank.
//!
//! Bank entries are unit vectors, so cosine similarity is the dot product.
//! Results are ordered by descending similarity with ties broken by ascending
//! bank index. Both backends return identical neighborhoods: the partitioned
//! backend only skips partitions whose angular bound proves they cannot
//! contribute.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::trainer::EmbeddingBank;

/// Slack added to pruning bounds so rounding in `acos`/`cos` never discards
/// a true neighbor.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnBackend {
    #[default]
    BruteForce,
    Partitioned,
}

#[derive(Debug, Clone)]
struct Partition {
    pivot: Vec<f64>,
    /// Largest angle between the pivot and any member.
    radius: f64,
    members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KnnIndex {
    bank: Arc<EmbeddingBank>,
    k: usize,
    backend: KnnBackend,
    partitions: Vec<Partition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    /// Renormalized mean of the neighbor embeddings.
    pub centroid: Vec<f64>,
}

/// Descending similarity, then ascending index.
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl KnnIndex {
    pub fn build(bank: Arc<EmbeddingBank>, k: usize, backend: KnnBackend) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        if k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if k > bank.len() {
            return Err(Error::KTooLarge { k, size: bank.len() });
        }
        let partitions = match backend {
            KnnBackend::BruteForce => Vec::new(),
            KnnBackend::Partitioned => partition(&bank),
        };
        Ok(Self {
            bank,
            k,
            backend,
            partitions,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn backend(&self) -> KnnBackend {
        self.backend
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    /// Neighborhood of a unit query vector.
    pub fn query(&self, z: &[f64]) -> Result<Neighborhood> {
        if z.len() != self.bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.bank.dim(),
                got: z.len(),
            });
        }
        let top = match self.backend {
            KnnBackend::BruteForce => self.top_k_brute(z),
            KnnBackend::Partitioned => self.top_k_partitioned(z).0,
        };
        let centroid = numeric::normalized_mean(
            top.iter().map(|&(_, i)| self.bank.embedding(i)),
            self.bank.dim(),
        )
        .map_err(|_| Error::DegenerateCentroid)?;
        Ok(Neighborhood {
            indices: top.iter().map(|&(_, i)| i).collect(),
            similarities: top.iter().map(|&(s, _)| s).collect(),
            centroid,
        })
    }

    fn top_k_brute(&self, z: &[f64]) -> Vec<(f64, usize)> {
        let mut scored: Vec<(f64, usize)> = self
            .bank
            .embeddings()
            .iter()
            .enumerate()
            .map(|(i, e)| (numeric::dot(z, e), i))
            .collect();
        scored.sort_by(rank);
        scored.truncate(self.k);
        scored
    }

    /// Top-K plus the number of bank entries actually scored.
    fn top_k_partitioned(&self, z: &[f64]) -> (Vec<(f64, usize)>, usize) {
        let mut order: Vec<(f64, usize)> = self
            .partitions
            .iter()
            .enumerate()
            .map(|(p, part)| (numeric::dot(z, &part.pivot), p))
            .collect();
        order.sort_by(rank);

        let mut top: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        let mut scanned = 0;
        for (pivot_sim, p) in order {
            let part = &self.partitions[p];
            if top.len() == self.k {
                let angle = pivot_sim.clamp(-1.0, 1.0).acos();
                let bound = (angle - part.radius).max(0.0).cos() + BOUND_SLACK;
                if bound < top[self.k - 1].0 {
                    continue;
                }
            }
            scanned += part.members.len();
            for &i in &part.members {
                let cand = (numeric::dot(z, self.bank.embedding(i)), i);
                if top.len() == self.k && rank(&cand, &top[self.k - 1]) != Ordering::Less {
                    continue;
                }
                let pos = top.partition_point(|x| rank(x, &cand) == Ordering::Less);
                top.insert(pos, cand);
                top.truncate(self.k);
            }
        }
        (top, scanned)
    }
}

/// Farthest-point pivots, about `sqrt(n)` of them, with every entry assigned
/// to its most similar pivot.
fn partition(bank: &EmbeddingBank) -> Vec<Partition> {
    let n = bank.len();
    let count = ((n as f64).sqrt().ceil() as usize).clamp(1, n);
    let mut pivots = vec![0usize];
    let mut best_sim: Vec<f64> = bank
        .embeddings()
        .iter()
        .map(|e| numeric::dot(e, bank.embedding(0)))
        .collect();
    while pivots.len() < count {
        let next = (0..n)
            .min_by(|&a, &b| best_sim[a].total_cmp(&best_sim[b]).then(a.cmp(&b)))
            .unwrap();
        pivots.push(next);
        for (i, s) in best_sim.iter_mut().enumerate() {
            *s = s.max(numeric::dot(bank.embedding(i), bank.embedding(next)));
        }
    }

    let mut parts: Vec<Partition> = pivots
        .iter()
        .map(|&p| Partition {
            pivot: bank.embedding(p).to_vec(),
            radius: 0.0,
            members: Vec::new(),
        })
        .collect();
    for i in 0..n {
        let e = bank.embedding(i);
        let sims: Vec<f64> = parts.iter().map(|p| numeric::dot(e, &p.pivot)).collect();
        let best = numeric::argmax(&sims);
        let part = &mut parts[best];
        part.members.push(i);
        part.radius = part.radius.max(sims[best].clamp(-1.0, 1.0).acos());
    }
    parts.retain(|p| !p.members.is_empty());
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        numeric::l2_normalize(&v).unwrap()
    }

    fn random_bank(n: usize, d: usize, classes: usize, seed: u64) -> Arc<EmbeddingBank> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Arc::new(EmbeddingBank::from_embeddings(e, labels, classes).unwrap())
    }

    #[test]
    fn single_entry_bank() {
        let bank = Arc::new(EmbeddingBank::from_embeddings(vec![vec![0.0, 1.0]], vec![0], 1).unwrap());
        let idx = KnnIndex::build(bank, 1, KnnBackend::BruteForce).unwrap();
        let n = idx.query(&[1.0, 0.0]).unwrap();
        assert_eq!(n.indices, vec![0]);
        assert_eq!(n.centroid, vec![0.0, 1.0]);
    }

    #[test]
    fn build_errors() {
        let bank = random_bank(5, 3, 2, 1);
        assert!(matches!(
            KnnIndex::build(bank.clone(), 6, KnnBackend::BruteForce),
            Err(Error::KTooLarge { k: 6, size: 5 })
        ));
        assert!(KnnIndex::build(bank, 0, KnnBackend::Partitioned).is_err());
    }

    #[test]
    fn exact_hit_with_k1() {
        let bank = random_bank(30, 4, 3, 2);
        let idx = KnnIndex::build(bank.clone(), 1, KnnBackend::BruteForce).unwrap();
        let n = idx.query(bank.embedding(17)).unwrap();
        assert_eq!(n.indices, vec![17]);
        assert_eq!(n.centroid, bank.embedding(17).to_vec());
    }

    #[test]
    fn k_equals_bank_size_gives_global_mean() {
        let bank = random_bank(12, 3, 2, 3);
        let idx = KnnIndex::build(bank.clone(), 12, KnnBackend::BruteForce).unwrap();
        let n = idx.query(bank.embedding(0)).unwrap();
        let mut ids = n.indices.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
        let mean = numeric::normalized_mean(bank.embeddings().iter().map(Vec::as_slice), 3).unwrap();
        for (a, b) in n.centroid.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_by_index() {
        let e = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, -1.0], vec![1.0, 0.0]];
        let bank = Arc::new(EmbeddingBank::from_embeddings(e, vec![0, 1, 1, 0], 2).unwrap());
        for backend in [KnnBackend::BruteForce, KnnBackend::Partitioned] {
            let idx = KnnIndex::build(bank.clone(), 3, backend).unwrap();
            let z = numeric::l2_normalize(&[1.0, 1.0]).unwrap();
            assert_eq!(idx.query(&z).unwrap().indices, vec![0, 1, 3]);
        }
    }

    #[test]
    fn antipodal_neighbors_have_no_centroid() {
        let e = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let bank = Arc::new(EmbeddingBank::from_embeddings(e, vec![0, 1], 2).unwrap());
        let idx = KnnIndex::build(bank, 2, KnnBackend::BruteForce).unwrap();
        assert!(matches!(idx.query(&[0.0, 1.0]), Err(Error::DegenerateCentroid)));
    }

    #[test]
    fn partitioned_matches_brute_force() {
        let bank = random_bank(200, 8, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [1, 5, 10, 37] {
            let brute = KnnIndex::build(bank.clone(), k, KnnBackend::BruteForce).unwrap();
            let fast = KnnIndex::build(bank.clone(), k, KnnBackend::Partitioned).unwrap();
            for _ in 0..50 {
                let z = random_unit(&mut rng, 8);
                let (a, b) = (brute.query(&z).unwrap(), fast.query(&z).unwrap());
                assert_eq!(a, b);
                assert!(a.similarities.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn partitioned_prunes_clustered_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let centers: Vec<Vec<f64>> = (0..8).map(|_| random_unit(&mut rng, 8)).collect();
        let e: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let c = &centers[i % 8];
                let v: Vec<f64> = c.iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect();
                numeric::l2_normalize(&v).unwrap()
            })
            .collect();
        let bank = Arc::new(EmbeddingBank::from_embeddings(e, (0..400).map(|i| i % 8).collect(), 8).unwrap());
        let fast = KnnIndex::build(bank.clone(), 5, KnnBackend::Partitioned).unwrap();
        let brute = KnnIndex::build(bank.clone(), 5, KnnBackend::BruteForce).unwrap();
        let z = bank.embedding(11).to_vec();
        let (_, scanned) = fast.top_k_partitioned(&z);
        assert!(scanned < bank.len());
        assert_eq!(fast.query(&z).unwrap(), brute.query(&z).unwrap());
    }

    #[test]
    fn query_is_repeatable() {
        let bank = random_bank(50, 4, 2, 6);
        let idx = KnnIndex::build(bank.clone(), 7, KnnBackend::Partitioned).unwrap();
        let z = bank.embedding(3).to_vec();
        assert_eq!(idx.query(&z).unwrap(), idx.query(&z).unwrap());
        assert!(idx.query(&[1.0]).is_err());
    }
}
