//! Normalized cross-correlation between modality features and
//! classification metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Matrix2;

/// Normalized cross-correlation of two equally sized feature maps:
///
/// `(1/P) Σ (F1 − mean₁)(F2 − mean₂) / (σ₁ σ₂)`
///
/// with `P` the element count and population standard deviations. Both
/// inputs need non-zero variance.
pub fn ncc(f1: &Matrix2, f2: &Matrix2) -> Result<f64> {
    if f1.dims() != f2.dims() {
        return Err(shape_err!(
            "{}x{} vs {}x{}",
            f1.rows(),
            f1.cols(),
            f2.rows(),
            f2.cols()
        ));
    }
    ncc_slices(f1.data(), f2.data())
}

/// [`ncc`] over flat slices.
pub fn ncc_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("{} vs {} elements", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(invalid!("ncc of empty features"));
    }
    let p = a.len() as f64;
    let ma = a.iter().sum::<f64>() / p;
    let mb = b.iter().sum::<f64>() / p;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(invalid!("ncc undefined: zero variance"));
    }
    let (sa, sb) = (libm::sqrt(va / p), libm::sqrt(vb / p));
    Ok(cov / p / (sa * sb))
}

/// NCC per named stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NccTable {
    pub rows: Vec<(String, f64)>,
}

impl NccTable {
    pub fn get(&self, stage: &str) -> Option<f64> {
        self.rows.iter().find(|(s, _)| s == stage).map(|(_, v)| *v)
    }
}

/// Accuracy and a confusion matrix (rows = truth, columns = prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(shape_err!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    let k = pred
        .iter()
        .chain(truth)
        .max()
        .map_or(0, |&m| m + 1)
        .max(n_classes);
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    Ok(Metrics {
        accuracy,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix2::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn self_and_negated() {
        let f = sample(7, 9, 1);
        assert!((ncc(&f, &f).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&f, &f.scale(-1.0)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_features_are_uncorrelated() {
        let a = sample(100, 100, 2);
        let b = sample(100, 100, 3);
        assert!(ncc(&a, &b).unwrap().abs() < 0.05);
    }

    #[test]
    fn degenerate_inputs() {
        let f = sample(3, 3, 4);
        assert!(ncc(&f, &Matrix2::filled(3, 3, 2.0)).is_err());
        assert!(ncc(&f, &sample(3, 4, 4)).is_err());
    }

    #[test]
    fn metrics_examples() {
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let m = metrics(&truth, &truth, 4).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.confusion[i][j], if i == j { 2 } else { 0 });
            }
        }
        let m = metrics(&[1; 8], &truth, 4).unwrap();
        assert_eq!(m.accuracy, 0.25);
        assert_eq!(m.confusion[0][1], 2);
        assert!(metrics(&[0], &truth, 4).is_err());
    }

    proptest! {
        #[test]
        fn ncc_symmetric_bounded_affine(seed in 0u64..10_000, s1 in 0.1f64..10.0, s2 in 0.1f64..10.0, t1 in -5.0f64..5.0, t2 in -5.0f64..5.0) {
            let a = sample(5, 6, seed);
            let b = sample(5, 6, seed + 1).add(&a.scale(0.3)).unwrap();
            let ab = ncc(&a, &b).unwrap();
            prop_assert!((ab - ncc(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
            let a2 = a.map(|v| s1 * v + t1);
            let b2 = b.map(|v| s2 * v + t2);
            prop_assert!((ncc(&a2, &b2).unwrap() - ab).abs() <= 1e-10);
        }

        #[test]
        fn metrics_permutation_invariant(labels in proptest::collection::vec((0usize..4, 0usize..4), 1..40), rot in 0usize..40) {
            let pred: Vec<usize> = labels.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = labels.iter().map(|p| p.1).collect();
            let k = rot % labels.len();
            let mut p2 = pred.clone();
            let mut t2 = truth.clone();
            p2.rotate_left(k);
            t2.rotate_left(k);
            p2.reverse();
            t2.reverse();
            let a = metrics(&pred, &truth, 4).unwrap();
            prop_assert_eq!(&a, &metrics(&p2, &t2, 4).unwrap());
            let total: usize = a.confusion.iter().flatten().sum();
            prop_assert_eq!(total, labels.len());
        }
    }
}
