//! One-vs-rest linear SVM trained by stochastic subgradient descent.
//!
//! Each binary problem minimizes
//!
//! ```text
//! J(w, b) = λ/2 · (‖w‖² + b²) + (1/n) Σ_i max(0, 1 − y_i (w·x_i + b)),   λ = 1/(C·n)
//! ```
//!
//! which is `(1/2C)‖w‖² + Σ hinge` scaled by `1/(C·n)`, with the bias folded
//! in as a regularized constant feature. Steps are `1/(λt)` with projection
//! onto the ball of radius `1/√λ`; the returned weights are the average of
//! the end-of-epoch iterates over the second half of the epochs.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Matrix2;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Standardize columns to zero mean and unit variance before training.
    pub standardize: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 100,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub c: f64,
    pub n_classes: usize,
    /// One weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Column means subtracted before scoring (zeros when not standardizing).
    pub mean: Vec<f64>,
    /// Column scales divided out before scoring (ones when not standardizing;
    /// constant columns keep scale one).
    pub scale: Vec<f64>,
}

/// Per-class objective after each epoch: at the current iterate during the
/// first half of training, at the averaged iterate afterwards.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SvmTrace {
    pub objectives: Vec<Vec<f64>>,
}

/// Binary objective `J(w, b)` on already-transformed features, `y ∈ {±1}`.
pub fn binary_objective(x: &Matrix2, y: &[f64], w: &[f64], b: f64, lambda: f64) -> f64 {
    let n = x.rows();
    let hinge: f64 = (0..n)
        .map(|i| (1.0 - y[i] * (dot(x.row(i), w) + b)).max(0.0))
        .sum();
    let norm: f64 = w.iter().map(|v| v * v).sum::<f64>() + b * b;
    0.5 * lambda * norm + hinge / n as f64
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn column_stats(x: &Matrix2) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dims();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = libm::sqrt(s / n as f64);
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn transform(x: &Matrix2, mean: &[f64], scale: &[f64]) -> Matrix2 {
    let (n, d) = x.dims();
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        out.extend(x.row(r).iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s));
    }
    Matrix2::from_vec_unchecked(n, d, out)
}

/// Trains the one-vs-rest model. Labels must cover at least two classes.
pub fn train_svm(x: &Matrix2, y: &[usize], cfg: &SvmConfig) -> Result<SvmModel> {
    Ok(train_svm_traced(x, y, cfg)?.0)
}

/// [`train_svm`] plus the per-epoch objective trace.
pub fn train_svm_traced(x: &Matrix2, y: &[usize], cfg: &SvmConfig) -> Result<(SvmModel, SvmTrace)> {
    let (n, d) = x.dims();
    if n != y.len() {
        return Err(shape_err!("{} rows but {} labels", n, y.len()));
    }
    if !(cfg.c > 0.0 && cfg.c.is_finite()) {
        return Err(invalid!("C must be positive, got {}", cfg.c));
    }
    if cfg.epochs == 0 {
        return Err(invalid!("need at least one epoch"));
    }
    let n_classes = y.iter().max().map_or(0, |&m| m + 1);
    let distinct = (0..n_classes).filter(|k| y.contains(k)).count();
    if distinct < 2 {
        return Err(invalid!("SVM training needs at least 2 classes, got {}", distinct));
    }
    let (mean, scale) = if cfg.standardize {
        column_stats(x)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let xs = if cfg.standardize {
        transform(x, &mean, &scale)
    } else {
        x.clone()
    };
    let lambda = 1.0 / (cfg.c * n as f64);
    let sq_norms: Vec<f64> = (0..n).map(|i| dot(xs.row(i), xs.row(i))).collect();
    let mut weights = Vec::with_capacity(n_classes);
    let mut bias = Vec::with_capacity(n_classes);
    let mut trace = SvmTrace::default();
    for class in 0..n_classes {
        let targets: Vec<f64> = y.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let seed = cfg.seed.wrapping_add(class as u64);
        let (w, b, objectives) = pegasos(&xs, &targets, &sq_norms, lambda, cfg.epochs, seed);
        weights.push(w);
        bias.push(b);
        trace.objectives.push(objectives);
    }
    Ok((
        SvmModel {
            c: cfg.c,
            n_classes,
            weights,
            bias,
            mean,
            scale,
        },
        trace,
    ))
}

fn pegasos(
    x: &Matrix2,
    y: &[f64],
    sq_norms: &[f64],
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> (Vec<f64>, f64, Vec<f64>) {
    let (n, d) = x.dims();
    let radius_sq = 1.0 / lambda;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    // w = scale · v, with ‖v‖² tracked incrementally
    let mut v = vec![0.0; d];
    let mut scale = 1.0;
    let mut v_sq = 0.0;
    let mut b = 0.0;
    let mut avg_w = vec![0.0; d];
    let mut avg_b = 0.0;
    let mut objectives = Vec::with_capacity(epochs);
    let mut t = 0usize;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let row = x.row(i);
            let vx = dot(&v, row);
            let margin = y[i] * (scale * vx + b);
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.fill(0.0);
                v_sq = 0.0;
                scale = 1.0;
                b = 0.0;
            } else {
                scale *= shrink;
                b *= shrink;
            }
            if margin < 1.0 {
                let a = eta * y[i] / scale;
                let vx_now = if shrink <= 0.0 { 0.0 } else { vx };
                for (vj, xj) in v.iter_mut().zip(row) {
                    *vj += a * xj;
                }
                v_sq += 2.0 * a * vx_now + a * a * sq_norms[i];
                b += eta * y[i];
            }
            let norm_sq = scale * scale * v_sq + b * b;
            if norm_sq > radius_sq {
                let r = libm::sqrt(radius_sq / norm_sq);
                scale *= r;
                b *= r;
            }
            if scale < 1e-9 {
                for vj in v.iter_mut() {
                    *vj *= scale;
                }
                v_sq *= scale * scale;
                scale = 1.0;
            }
        }
        // running mean of the end-of-epoch iterates from the second half of
        // training; the early large-step iterates only slow convergence
        let first = epochs / 2;
        if epoch >= first {
            let k = (epoch + 1 - first) as f64;
            for (a, vj) in avg_w.iter_mut().zip(&v) {
                *a += (scale * vj - *a) / k;
            }
            avg_b += (b - avg_b) / k;
            objectives.push(binary_objective(x, y, &avg_w, avg_b, lambda));
        } else {
            let w: Vec<f64> = v.iter().map(|vj| scale * vj).collect();
            objectives.push(binary_objective(x, y, &w, b, lambda));
        }
    }
    (avg_w, avg_b, objectives)
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Class scores, one row per sample.
    pub fn decision_function(&self, x: &Matrix2) -> Result<Matrix2> {
        if x.rows() > 0 && x.cols() != self.dim() {
            return Err(shape_err!("{} feature columns, model expects {}", x.cols(), self.dim()));
        }
        let xs = transform(x, &self.mean, &self.scale);
        Ok(Matrix2::from_fn(x.rows(), self.n_classes, |r, k| {
            dot(xs.row(r), &self.weights[k]) + self.bias[k]
        }))
    }

    /// Highest-scoring class per row; ties go to the lowest class id.
    pub fn predict(&self, x: &Matrix2) -> Result<Vec<usize>> {
        let scores = self.decision_function(x)?;
        Ok((0..scores.rows())
            .map(|r| {
                let row = scores.row(r);
                let mut best = 0;
                for (k, &s) in row.iter().enumerate() {
                    if s > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Matrix2, Vec<usize>) {
        let pts: [(f64, f64, usize); 8] = [
            (1.0, 2.0, 0),
            (1.5, 1.8, 0),
            (0.5, 2.5, 0),
            (1.2, 3.0, 0),
            (-1.0, -0.5, 1),
            (-1.5, -1.0, 1),
            (-0.3, -1.2, 1),
            (-2.0, 0.1, 1),
        ];
        let x = Matrix2::from_fn(8, 2, |r, c| if c == 0 { pts[r].0 } else { pts[r].1 });
        (x, pts.iter().map(|p| p.2).collect())
    }

    #[test]
    fn separable_toy_is_fit() {
        let (x, y) = toy();
        let m = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn tiny_c_gives_null_model() {
        let (x, y) = toy();
        let cfg = SvmConfig {
            c: 1e-9,
            ..SvmConfig::default()
        };
        let m = train_svm(&x, &y, &cfg).unwrap();
        for w in &m.weights {
            assert!(w.iter().all(|v| v.abs() < 1e-3));
        }
        // every class score collapses toward zero, the all-tie limit in
        // which predict() returns class 0 for every row
        let scores = m.decision_function(&x).unwrap();
        assert!(scores.data().iter().all(|s| s.abs() < 1e-6));
        let looser = train_svm(&x, &y, &SvmConfig { c: 1e-6, ..cfg }).unwrap();
        let peak = |m: &SvmModel| m.decision_function(&x).unwrap().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(peak(&m) < peak(&looser) * 1e-2);
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = toy();
        assert!(train_svm(&x, &[0; 8], &SvmConfig::default()).is_err());
        assert!(train_svm(&x, &[0; 7], &SvmConfig::default()).is_err());
    }

    #[test]
    fn predict_shapes() {
        let (x, y) = toy();
        let m = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert!(m.predict(&Matrix2::zeros(0, 2)).unwrap().is_empty());
        assert!(m.predict(&Matrix2::zeros(2, 3)).is_err());
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let m = SvmModel {
            c: 1.0,
            n_classes: 3,
            weights: vec![vec![0.0], vec![0.0], vec![0.0]],
            bias: vec![0.0, 1.0, 1.0],
            mean: vec![0.0],
            scale: vec![1.0],
        };
        assert_eq!(m.predict(&Matrix2::zeros(2, 1)).unwrap(), vec![1, 1]);
    }

    #[test]
    fn standardization_absorbs_feature_scale() {
        let (x, y) = toy();
        let cfg = SvmConfig::default();
        let a = train_svm(&x, &y, &cfg).unwrap().predict(&x).unwrap();
        let scaled = x.scale(37.5);
        let m = train_svm(&scaled, &y, &cfg).unwrap();
        assert_eq!(m.predict(&scaled).unwrap(), a);
        let stored = column_stats(&scaled);
        assert_eq!(m.mean, stored.0);
        assert_eq!(m.scale, stored.1);
    }

    #[test]
    fn multiclass_blobs() {
        let centers = [(0.0, 4.0), (4.0, 0.0), (-4.0, -1.0)];
        let x = Matrix2::from_fn(30, 2, |r, c| {
            let (cx, cy) = centers[r % 3];
            let jitter = ((r * 7 + c * 3) % 5) as f64 * 0.2 - 0.4;
            if c == 0 {
                cx + jitter
            } else {
                cy - jitter
            }
        });
        let y: Vec<usize> = (0..30).map(|r| r % 3).collect();
        let m = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn averaged_objective_is_nonincreasing() {
        let (x, y) = toy();
        let (_, trace) = train_svm_traced(&x, &y, &SvmConfig::default()).unwrap();
        for obj in &trace.objectives {
            for w in obj[obj.len() / 2..].windows(2).skip(1) {
                assert!(w[1] <= w[0] * 1.01, "{} -> {}", w[0], w[1]);
            }
        }
    }
}
