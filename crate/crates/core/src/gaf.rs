//! Gated average fusion.
//!
//! Each modality's flattened `N × M` feature map `F_i` is convolved with a
//! fixed high-boost kernel, squashed with a sigmoid into a gate map
//! `G_i = σ(F_i ⊛ K)`, and the fused map is `Σ_i G_i ⊙ F_i`. The fused map has
//! the dims of a single input for any number of modalities.
//!
//! Three ablations are provided alongside: plain summation (gates fixed to
//! one), gating without the kernel (`σ(F_i)`), and column concatenation.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{conv2d_same, flatten4d, logistic, sigmoid, Kernel2, Matrix2, Tensor4};

/// 3×3 high-boost kernel: −1 everywhere except `A + 8` at the center.
///
/// The weights sum to `A`, so `A = 1` passes constant regions through
/// unchanged while boosting local detail.
pub fn high_boost_kernel(amplification: f64) -> Kernel2 {
    let mut w = alloc::vec![-1.0; 9];
    w[4] = amplification + 8.0;
    Kernel2::new(3, 3, w).expect("3x3 is odd")
}

/// The kernel used by default (`A = 1`).
pub fn default_kernel() -> Kernel2 {
    high_boost_kernel(1.0)
}

/// How modality features are combined at a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// `Σ σ(F_i ⊛ K) ⊙ F_i`.
    GatedAverage,
    /// Gates forced to one, i.e. `Σ F_i`. Named after the ablation it
    /// reproduces; it is a sum, not a mean.
    Average,
    /// `Σ σ(F_i) ⊙ F_i`.
    GatedNoKernel,
    /// `[F_1 | F_2 | ...]`.
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::GatedAverage,
        FusionMode::Average,
        FusionMode::GatedNoKernel,
        FusionMode::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::GatedAverage => "gated_average",
            FusionMode::Average => "average",
            FusionMode::GatedNoKernel => "gated_no_kernel",
            FusionMode::Concat => "concat",
        }
    }

    /// True for the modes whose output keeps single-input dims.
    pub fn is_summing(self) -> bool {
        !matches!(self, FusionMode::Concat)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid!("unknown fusion mode '{}'", s))
    }
}

/// Extent of the gating convolution.
///
/// `Batch` convolves the whole `N × M` batch-by-feature matrix, so taps on
/// the row axis mix neighbouring samples and gates depend on batch
/// composition. `PerSample` convolves each sample's `1 × M` row on its own,
/// which makes the gates of a sample independent of the rest of the batch.
/// The two agree when `N = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatingScope {
    #[default]
    Batch,
    PerSample,
}

impl GatingScope {
    pub fn name(self) -> &'static str {
        match self {
            GatingScope::Batch => "batch",
            GatingScope::PerSample => "per_sample",
        }
    }
}

impl fmt::Display for GatingScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GatingScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(GatingScope::Batch),
            "per_sample" => Ok(GatingScope::PerSample),
            _ => Err(invalid!("unknown gating scope '{}'", s)),
        }
    }
}

/// One gate map per modality, each with the dims of the features it gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMaps(pub Vec<Matrix2>);

/// `σ(F ⊛ K)` with size-preserving zero padding.
pub fn gate(features: &Matrix2, kernel: &Kernel2) -> Result<Matrix2> {
    Ok(sigmoid(&conv2d_same(features, kernel)?))
}

/// [`gate`] applied to every row independently.
pub fn gate_per_sample(features: &Matrix2, kernel: &Kernel2) -> Result<Matrix2> {
    let mut out = Vec::with_capacity(features.data().len());
    for r in 0..features.rows() {
        let row = Matrix2::new(1, features.cols(), features.row(r).to_vec())?;
        out.extend_from_slice(gate(&row, kernel)?.data());
    }
    Matrix2::new(features.rows(), features.cols(), out)
}

fn gate_scoped(features: &Matrix2, kernel: &Kernel2, scope: GatingScope) -> Result<Matrix2> {
    match scope {
        GatingScope::Batch => gate(features, kernel),
        GatingScope::PerSample => gate_per_sample(features, kernel),
    }
}

fn check_same_dims(features: &[Matrix2]) -> Result<(usize, usize)> {
    let dims = features
        .first()
        .ok_or_else(|| invalid!("no modalities to fuse"))?
        .dims();
    for (i, f) in features.iter().enumerate() {
        if f.dims() != dims {
            return Err(shape_err!(
                "modality {} is {}x{}, modality 0 is {}x{}",
                i,
                f.rows(),
                f.cols(),
                dims.0,
                dims.1
            ));
        }
    }
    Ok(dims)
}

/// Gate maps for a summing mode. `Concat` has no gates.
pub fn gate_maps(
    features: &[Matrix2],
    mode: FusionMode,
    kernel: &Kernel2,
    scope: GatingScope,
) -> Result<GateMaps> {
    let (rows, cols) = check_same_dims(features)?;
    let maps = match mode {
        FusionMode::GatedAverage => features
            .iter()
            .map(|f| gate_scoped(f, kernel, scope))
            .collect::<Result<Vec<_>>>()?,
        FusionMode::Average => features.iter().map(|_| Matrix2::filled(rows, cols, 1.0)).collect(),
        FusionMode::GatedNoKernel => features.iter().map(sigmoid).collect(),
        FusionMode::Concat => return Err(invalid!("concat mode has no gates")),
    };
    Ok(GateMaps(maps))
}

/// `Σ_i G_i ⊙ F_i` for caller-supplied gates.
pub fn gated_sum(features: &[Matrix2], gates: &GateMaps) -> Result<Matrix2> {
    let (rows, cols) = check_same_dims(features)?;
    if gates.0.len() != features.len() {
        return Err(shape_err!(
            "{} gate maps for {} modalities",
            gates.0.len(),
            features.len()
        ));
    }
    let mut out = alloc::vec![0.0; rows * cols];
    for (f, g) in features.iter().zip(&gates.0) {
        if g.dims() != (rows, cols) {
            return Err(shape_err!("gate map {}x{} vs features {}x{}", g.rows(), g.cols(), rows, cols));
        }
        for ((o, &fv), &gv) in out.iter_mut().zip(f.data()).zip(g.data()) {
            *o += gv * fv;
        }
    }
    Matrix2::new(rows, cols, out)
}

/// Fuses per-modality feature matrices with batch-scoped gating.
pub fn fuse(features: &[Matrix2], mode: FusionMode, kernel: &Kernel2) -> Result<Matrix2> {
    fuse_scoped(features, mode, kernel, GatingScope::Batch)
}

/// Fuses per-modality feature matrices.
///
/// Summing modes need identical dims and return those dims; `Concat` needs
/// equal row counts and returns the summed column count.
pub fn fuse_scoped(
    features: &[Matrix2],
    mode: FusionMode,
    kernel: &Kernel2,
    scope: GatingScope,
) -> Result<Matrix2> {
    match mode {
        FusionMode::Concat => {
            if features.is_empty() {
                return Err(invalid!("no modalities to fuse"));
            }
            let refs: Vec<&Matrix2> = features.iter().collect();
            Matrix2::concat_cols(&refs)
        }
        FusionMode::Average => {
            let (rows, cols) = check_same_dims(features)?;
            let mut out = features[0].data().to_vec();
            for f in &features[1..] {
                for (o, &v) in out.iter_mut().zip(f.data()) {
                    *o += v;
                }
            }
            Matrix2::new(rows, cols, out)
        }
        FusionMode::GatedNoKernel => {
            let (rows, cols) = check_same_dims(features)?;
            let mut out = alloc::vec![0.0; rows * cols];
            for f in features {
                for (o, &v) in out.iter_mut().zip(f.data()) {
                    *o += logistic(v) * v;
                }
            }
            Matrix2::new(rows, cols, out)
        }
        FusionMode::GatedAverage => {
            let gates = gate_maps(features, mode, kernel, scope)?;
            gated_sum(features, &gates)
        }
    }
}

/// Flattens each modality's stage activations and fuses them.
pub fn fuse_stage(
    maps: &[Tensor4],
    mode: FusionMode,
    kernel: &Kernel2,
    scope: GatingScope,
) -> Result<Matrix2> {
    let dims = maps
        .first()
        .ok_or_else(|| invalid!("no modalities to fuse"))?
        .dims();
    if let Some(t) = maps.iter().find(|t| t.dims() != dims) {
        return Err(shape_err!("stage maps {:?} vs {:?}", t.dims(), dims));
    }
    let flat: Vec<Matrix2> = maps.iter().map(flatten4d).collect();
    fuse_scoped(&flat, mode, kernel, scope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Matrix2 {
        // small deterministic LCG pattern in [-2, 2]
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix2::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
    }

    #[test]
    fn kernel_values() {
        let k = high_boost_kernel(1.0);
        assert_eq!(k.weights(), &[-1.0, -1.0, -1.0, -1.0, 9.0, -1.0, -1.0, -1.0, -1.0]);
        assert_eq!(k.sum(), 1.0);
        let k0 = high_boost_kernel(0.0);
        assert_eq!(k0.get(1, 1), 8.0);
        assert_eq!(k0.sum(), 0.0);
    }

    #[test]
    fn kernel_on_constant_map() {
        let y = conv2d_same(&Matrix2::filled(6, 5, 2.5), &default_kernel()).unwrap();
        for r in 1..5 {
            for c in 1..4 {
                assert_eq!(y.get(r, c), 2.5);
            }
        }
    }

    #[test]
    fn gate_of_zeros_is_half() {
        let g = gate(&Matrix2::zeros(3, 4), &default_kernel()).unwrap();
        assert_eq!(g, Matrix2::filled(3, 4, 0.5));
    }

    #[test]
    fn gate_single_tap() {
        for &v in &[-0.7, 0.0, 0.2, 1.3] {
            let g = gate(&Matrix2::from_rows(&[&[v]]), &default_kernel()).unwrap();
            assert_eq!(g.get(0, 0), logistic(9.0 * v));
        }
    }

    #[test]
    fn gate_constant_interior() {
        let v = 0.8;
        let g = gate(&Matrix2::filled(5, 5, v), &default_kernel()).unwrap();
        assert!((g.get(2, 2) - logistic(v)).abs() < 1e-15);
    }

    #[test]
    fn zero_modality_is_annihilated() {
        let f1 = mat(4, 6, 1);
        let f2 = Matrix2::zeros(4, 6);
        let k = default_kernel();
        let fused = fuse(&[f1.clone(), f2], FusionMode::GatedAverage, &k).unwrap();
        let expected = gate(&f1, &k).unwrap().hadamard(&f1).unwrap();
        assert_eq!(fused, expected);
    }

    #[test]
    fn average_is_elementwise_sum() {
        let (f1, f2) = (mat(3, 5, 2), mat(3, 5, 3));
        let fused = fuse(&[f1.clone(), f2.clone()], FusionMode::Average, &default_kernel()).unwrap();
        assert_eq!(fused, f1.add(&f2).unwrap());
    }

    #[test]
    fn gated_no_kernel_formula() {
        let (f1, f2) = (mat(3, 5, 4), mat(3, 5, 5));
        let fused =
            fuse(&[f1.clone(), f2.clone()], FusionMode::GatedNoKernel, &default_kernel()).unwrap();
        let expected = sigmoid(&f1)
            .hadamard(&f1)
            .unwrap()
            .add(&sigmoid(&f2).hadamard(&f2).unwrap())
            .unwrap();
        assert_eq!(fused, expected);
    }

    #[test]
    fn average_equals_forced_unit_gates() {
        let fs = vec![mat(4, 3, 6), mat(4, 3, 7), mat(4, 3, 8)];
        let k = default_kernel();
        let ones = GateMaps(fs.iter().map(|_| Matrix2::filled(4, 3, 1.0)).collect());
        assert_eq!(
            gated_sum(&fs, &ones).unwrap(),
            fuse(&fs, FusionMode::Average, &k).unwrap()
        );
        let forced = gate_maps(&fs, FusionMode::Average, &k, GatingScope::Batch).unwrap();
        assert_eq!(forced, ones);
    }

    #[test]
    fn dims_for_k_modalities() {
        let k = default_kernel();
        for count in 1..=4 {
            let fs: Vec<Matrix2> = (0..count).map(|i| mat(5, 7, i as u64)).collect();
            for mode in [FusionMode::GatedAverage, FusionMode::Average, FusionMode::GatedNoKernel] {
                assert_eq!(fuse(&fs, mode, &k).unwrap().dims(), (5, 7));
            }
            assert_eq!(fuse(&fs, FusionMode::Concat, &k).unwrap().dims(), (5, 7 * count));
        }
    }

    #[test]
    fn concat_needs_only_rows() {
        let fused = fuse(&[mat(2, 3, 1), mat(2, 5, 2)], FusionMode::Concat, &default_kernel()).unwrap();
        assert_eq!(fused.dims(), (2, 8));
        assert!(fuse(&[mat(2, 3, 1), mat(3, 3, 2)], FusionMode::Concat, &default_kernel()).is_err());
    }

    #[test]
    fn fuse_errors() {
        let k = default_kernel();
        assert!(matches!(
            fuse(&[], FusionMode::GatedAverage, &k),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            fuse(&[mat(2, 3, 1), mat(2, 4, 1)], FusionMode::Average, &k),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn per_sample_matches_single_row_batches() {
        let f = mat(4, 9, 11);
        let k = default_kernel();
        let g = gate_per_sample(&f, &k).unwrap();
        for r in 0..4 {
            let row = Matrix2::new(1, 9, f.row(r).to_vec()).unwrap();
            assert_eq!(g.row(r), gate(&row, &k).unwrap().data());
        }
        // batch-scoped gates couple rows, so they differ in general
        assert_ne!(g, gate(&f, &k).unwrap());
    }

    #[test]
    fn fuse_stage_examples() {
        let k = default_kernel();
        let t = Tensor4::new(2, 2, 3, 1, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let out = fuse_stage(&[t.clone(), t.clone()], FusionMode::Average, &k, GatingScope::Batch)
            .unwrap();
        assert_eq!(out.dims(), (1, 12));
        assert_eq!(out, flatten4d(&t).scale(2.0));
        let other = Tensor4::zeros(2, 2, 2, 1);
        assert!(fuse_stage(&[t, other], FusionMode::Average, &k, GatingScope::Batch).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(m.name().parse::<FusionMode>().unwrap(), m);
        }
        assert!("mean".parse::<FusionMode>().is_err());
    }

    proptest! {
        #[test]
        fn gates_strictly_inside_unit_interval(
            d in proptest::collection::vec(-2.0f64..2.0, 1..40),
            rows in 1usize..4,
        ) {
            let cols = d.len();
            let f = Matrix2::new(1, cols, d).unwrap();
            let stacked = Matrix2::from_fn(rows, cols, |_, c| f.get(0, c));
            for g in [gate(&stacked, &default_kernel()).unwrap(), sigmoid(&stacked)] {
                prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn summing_modes_ignore_modality_order(seed in 0u64..500, count in 2usize..5) {
            let fs: Vec<Matrix2> = (0..count).map(|i| mat(3, 6, seed * 10 + i as u64)).collect();
            let mut rev = fs.clone();
            rev.reverse();
            let k = default_kernel();
            for mode in [FusionMode::GatedAverage, FusionMode::Average, FusionMode::GatedNoKernel] {
                let a = fuse(&fs, mode, &k).unwrap();
                let b = fuse(&rev, mode, &k).unwrap();
                for (p, q) in a.data().iter().zip(b.data()) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }
}
