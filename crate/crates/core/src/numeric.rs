//! Vector primitives shared by the rest of the crate.
//!
//! Vectors are plain `f64` slices. Every routine here is pure.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Temperature-scaled softmax, `softmax(logits / temperature)`.
///
/// The maximum scaled logit is subtracted before exponentiation so large
/// logits never overflow.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(Error::InvalidTemperature(temperature));
    }
    Ok(softmax_unchecked(logits, temperature))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(values)))`, computed stably.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Renormalized arithmetic mean of a set of vectors.
pub fn normalized_mean<'a, I>(vectors: I, dim: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::ZeroNorm);
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    l2_normalize(&sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(&[1.0, 0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4], 1.0).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));

        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);

        let p = softmax(&[5.0, 1.0], 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-5 && (p[1] - 0.5).abs() < 1e-5);

        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::InvalidTemperature(_))));
        assert!(matches!(softmax(&[1.0], -2.0), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&[1e4, -1e4, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        (1usize..8).prop_flat_map(|d| prop::collection::vec(-100.0f64..100.0, d))
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in vec_strategy(), t in 0.1f64..10.0) {
            let p = softmax(&logits, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|x| *x > 0.0 || logits.len() > 1));
        }

        #[test]
        fn softmax_temperature_is_prescaling(logits in vec_strategy(), t in 0.1f64..10.0) {
            let a = softmax(&logits, t).unwrap();
            let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
            let b = softmax(&scaled, 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_invariant(
            (a, b) in (2usize..8).prop_flat_map(|d| (
                prop::collection::vec(0.1f64..10.0, d),
                prop::collection::vec(-10.0f64..10.0, d),
            )),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&b) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let s0 = cosine_similarity(&a, &b).unwrap();
            let s1 = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-12);
            prop_assert!((s0 - cosine_similarity(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn normalize_idempotent(v in vec_strategy()) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() < 1e-9);
            for (x, y) in once.iter().zip(&twice) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
