//! Multistage fusion: align samples across modalities, fuse every tapped
//! stage with [`crate::gaf`], and concatenate the fused stages into the
//! multimodal layer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnn::StageActivations;
use crate::diagnostics::{ncc_slices, NccTable};
use crate::error::{invalid, shape_err, Error, Result};
use crate::gaf::{fuse_stage, FusionMode, GatingScope};
use crate::tensor::{Kernel2, Matrix2, Tensor4};

/// How a modality with several images per instance is matched to each
/// anchor sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingPolicy {
    /// A seeded uniform pick among the instance's images.
    RandomFrame,
    /// The mean of the features of all the instance's images.
    MeanFrame,
}

impl PairingPolicy {
    pub fn name(self) -> &'static str {
        match self {
            PairingPolicy::RandomFrame => "random_frame",
            PairingPolicy::MeanFrame => "mean_frame",
        }
    }
}

impl fmt::Display for PairingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PairingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_frame" => Ok(PairingPolicy::RandomFrame),
            "mean_frame" => Ok(PairingPolicy::MeanFrame),
            _ => Err(invalid!("unknown pairing policy '{}'", s)),
        }
    }
}

/// Which image(s) of a modality feed one aligned sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pick {
    Image(usize),
    Mean(Vec<usize>),
}

/// One fusible sample: a pick per modality, all from the same instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSample {
    pub instance: usize,
    pub picks: Vec<Pick>,
}

/// Aligns images across modalities.
///
/// `owners[m][i]` is the instance that image `i` of modality `m` belongs to.
/// Every image of the `anchor` modality yields one aligned sample; the other
/// modalities contribute per `policy`. Instances are visited in the order
/// given, anchor images in index order.
pub fn pair_samples(
    instances: &[usize],
    owners: &[&[usize]],
    anchor: usize,
    policy: PairingPolicy,
    seed: u64,
) -> Result<Vec<AlignedSample>> {
    if anchor >= owners.len() {
        return Err(invalid!("anchor modality {} of {}", anchor, owners.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_instance = |m: usize, inst: usize| -> Vec<usize> {
        owners[m]
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == inst)
            .map(|(i, _)| i)
            .collect()
    };
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for &inst in instances {
        let images: Vec<Vec<usize>> = (0..owners.len()).map(|m| by_instance(m, inst)).collect();
        if images.iter().any(Vec::is_empty) {
            missing.push(inst);
            continue;
        }
        for &a in &images[anchor] {
            let picks = images
                .iter()
                .enumerate()
                .map(|(m, imgs)| {
                    if m == anchor {
                        Pick::Image(a)
                    } else {
                        match policy {
                            PairingPolicy::RandomFrame => Pick::Image(imgs[rng.random_range(0..imgs.len())]),
                            PairingPolicy::MeanFrame => Pick::Mean(imgs.clone()),
                        }
                    }
                })
                .collect();
            out.push(AlignedSample {
                instance: inst,
                picks,
            });
        }
    }
    if !missing.is_empty() {
        return Err(invalid!("instances missing a modality: {:?}", missing));
    }
    Ok(out)
}

/// Stage activations for one modality's column of `samples`, averaging
/// activations where the pick is a mean.
pub fn gather(acts: &StageActivations, samples: &[AlignedSample], modality: usize) -> Result<StageActivations> {
    let n = acts.batch();
    let mut stages = Vec::with_capacity(acts.stages.len());
    for t in &acts.stages {
        let len = t.sample_len();
        let mut data = Vec::with_capacity(samples.len() * len);
        for s in samples {
            match s.picks.get(modality) {
                Some(Pick::Image(i)) if *i < n => data.extend_from_slice(t.sample(*i)),
                Some(Pick::Mean(ids)) if !ids.is_empty() && ids.iter().all(|&i| i < n) => {
                    let mut acc = vec![0.0; len];
                    for &i in ids {
                        for (a, v) in acc.iter_mut().zip(t.sample(i)) {
                            *a += v;
                        }
                    }
                    let k = ids.len() as f64;
                    data.extend(acc.into_iter().map(|v| v / k));
                }
                _ => {
                    return Err(invalid!(
                        "instance {}: bad pick for modality {}",
                        s.instance,
                        modality
                    ))
                }
            }
        }
        stages.push(Tensor4::new(t.height(), t.width(), t.channels(), samples.len(), data)?);
    }
    Ok(StageActivations { stages })
}

/// Concatenated fused stages, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalFeatures {
    pub data: Matrix2,
    /// Start column of each stage block; blocks are contiguous and the last
    /// ends at `data.cols()`.
    pub stage_offsets: Vec<usize>,
    pub stage_names: Vec<String>,
}

impl MultimodalFeatures {
    pub fn new(data: Matrix2, stage_offsets: Vec<usize>, stage_names: Vec<String>) -> Result<Self> {
        if stage_offsets.len() != stage_names.len() {
            return Err(shape_err!("{} offsets for {} names", stage_offsets.len(), stage_names.len()));
        }
        if stage_offsets.first().is_some_and(|&o| o != 0)
            || stage_offsets.windows(2).any(|w| w[0] >= w[1])
            || stage_offsets.last().is_some_and(|&o| o >= data.cols())
        {
            return Err(invalid!(
                "stage offsets {:?} do not tile {} columns",
                stage_offsets,
                data.cols()
            ));
        }
        Ok(Self {
            data,
            stage_offsets,
            stage_names,
        })
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn cols(&self) -> usize {
        self.data.cols()
    }

    /// Column range of stage block `i`.
    pub fn block(&self, i: usize) -> Range<usize> {
        let end = self
            .stage_offsets
            .get(i + 1)
            .copied()
            .unwrap_or(self.data.cols());
        self.stage_offsets[i]..end
    }

    /// The same rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let refs: Vec<&[f64]> = rows.iter().map(|&r| self.data.row(r)).collect();
        Self {
            data: Matrix2::stack_rows(&refs).expect("rows share a width"),
            stage_offsets: self.stage_offsets.clone(),
            stage_names: self.stage_names.clone(),
        }
    }
}

/// How [`build_multimodal`] fuses.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSettings {
    pub mode: FusionMode,
    pub kernel: Kernel2,
    pub scope: GatingScope,
    /// With batch-scoped gating, rows are gated in consecutive chunks of this
    /// many samples (the batch the gating convolution sees).
    pub chunk: usize,
    /// Indices of the stages to tap.
    pub stages: Vec<usize>,
}

impl FusionSettings {
    pub fn new(mode: FusionMode, kernel: Kernel2) -> Self {
        Self {
            mode,
            kernel,
            scope: GatingScope::Batch,
            chunk: 64,
            stages: vec![0, 1, 2, 3],
        }
    }
}

/// Fuses each tapped stage across modalities and concatenates the fused
/// blocks column-wise.
pub fn build_multimodal(
    per_modality: &[StageActivations],
    settings: &FusionSettings,
    stage_names: &[&str],
) -> Result<MultimodalFeatures> {
    let first = per_modality
        .first()
        .ok_or_else(|| invalid!("no modalities"))?;
    let n = first.batch();
    for (m, acts) in per_modality.iter().enumerate() {
        if acts.stages.len() != first.stages.len() {
            return Err(shape_err!("modality {} has {} stages, modality 0 has {}", m, acts.stages.len(), first.stages.len()));
        }
        for (s, (a, b)) in acts.stages.iter().zip(&first.stages).enumerate() {
            if a.dims() != b.dims() {
                return Err(shape_err!("stage {}: modality {} is {:?}, modality 0 is {:?}", s, m, a.dims(), b.dims()));
            }
        }
    }
    if settings.stages.is_empty() {
        return Err(invalid!("no stages selected"));
    }
    let chunk = if settings.scope == GatingScope::Batch {
        settings.chunk.max(1)
    } else {
        n.max(1)
    };
    let mut blocks = Vec::with_capacity(settings.stages.len());
    let mut names = Vec::with_capacity(settings.stages.len());
    for &s in &settings.stages {
        if s >= first.stages.len() {
            return Err(invalid!("stage {} of {}", s, first.stages.len()));
        }
        names.push(
            stage_names
                .get(s)
                .map_or_else(|| format!("stage{}", s + 1), |v| String::from(*v)),
        );
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n || (n == 0 && parts.is_empty()) {
            let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let maps: Vec<Tensor4> = per_modality.iter().map(|a| a.stages[s].select(&rows)).collect();
            if rows.is_empty() {
                let width = maps[0].sample_len()
                    * if settings.mode.is_summing() { 1 } else { maps.len() };
                parts.push(Matrix2::zeros(0, width));
                break;
            }
            parts.push(fuse_stage(&maps, settings.mode, &settings.kernel, settings.scope)?);
            start += chunk;
        }
        let refs: Vec<&[f64]> = parts.iter().flat_map(|p| (0..p.rows()).map(move |r| p.row(r))).collect();
        let block = if refs.is_empty() {
            parts.swap_remove(0)
        } else {
            Matrix2::stack_rows(&refs)?
        };
        blocks.push(block);
    }
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut acc = 0;
    for b in &blocks {
        offsets.push(acc);
        acc += b.cols();
    }
    let refs: Vec<&Matrix2> = blocks.iter().collect();
    MultimodalFeatures::new(Matrix2::concat_cols(&refs)?, offsets, names)
}

/// NCC between two modalities' activations at each of the listed stages.
pub fn stage_ncc(a: &StageActivations, b: &StageActivations, stages: &[(usize, &str)]) -> Result<NccTable> {
    let mut rows = Vec::with_capacity(stages.len());
    for &(s, name) in stages {
        let (ta, tb) = match (a.stages.get(s), b.stages.get(s)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(invalid!("stage {} missing", s)),
        };
        if ta.dims() != tb.dims() {
            return Err(shape_err!("stage {}: {:?} vs {:?}", name, ta.dims(), tb.dims()));
        }
        rows.push((String::from(name), ncc_slices(ta.data(), tb.data())?));
    }
    Ok(NccTable { rows })
}
