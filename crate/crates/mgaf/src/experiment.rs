//! The end-to-end protocol: seeded train/test splits, one CNN per modality,
//! cross-modal pairing, stage-wise fusion and an SVM on the multimodal layer.

use std::time::Instant;

use mgaf_core::cnn::{CnnModel, StageActivations, TrainHistory};
use mgaf_core::data::{augment, ActionInstance};
use mgaf_core::diagnostics::{metrics, NccTable};
use mgaf_core::fusion::{build_multimodal, gather, pair_samples, stage_ncc, AlignedSample, FusionSettings, MultimodalFeatures};
use mgaf_core::gaf::{high_boost_kernel, FusionMode};
use mgaf_core::imaging::{build_sfis, build_signal_images, prewitt};
use mgaf_core::svm::{train_svm, SvmConfig, SvmModel};
use mgaf_core::{Matrix2, Tensor4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Variant, MODALITIES};
use crate::dataset::load_instances;
use crate::error::{Context, Error, Result};
use crate::report::{Report, ReportRow};

/// Index of the inertial modality; every aligned sample is anchored on one
/// of its signal images.
pub const ANCHOR: usize = 1;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seed for a (base seed, tag path) pair.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// All images of one modality with the instance each came from.
#[derive(Debug, Clone)]
pub struct ModalityImages {
    pub name: &'static str,
    pub images: Vec<Matrix2>,
    pub owner: Vec<usize>,
    /// Set for images built from augmented copies; these are only used for
    /// training.
    pub augmented: Vec<bool>,
}

/// Instances plus their encoded images, ready for splitting.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Vec<ActionInstance>,
    /// Distinct labels in ascending order; class index = position.
    pub classes: Vec<u32>,
    /// Class index of each instance.
    pub targets: Vec<usize>,
    pub modalities: Vec<ModalityImages>,
}

impl Dataset {
    pub fn prepare(instances: Vec<ActionInstance>, cfg: &ExperimentConfig) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let mut classes: Vec<u32> = instances.iter().map(|i| i.label).collect();
        classes.sort_unstable();
        classes.dedup();
        let targets = instances
            .iter()
            .map(|i| classes.binary_search(&i.label).expect("label collected"))
            .collect();

        let mut depth = ModalityImages {
            name: MODALITIES[0],
            images: Vec::new(),
            owner: Vec::new(),
            augmented: Vec::new(),
        };
        let mut inertial = ModalityImages {
            name: MODALITIES[1],
            ..depth.clone()
        };
        for (idx, inst) in instances.iter().enumerate() {
            for sfi in build_sfis(&inst.depth, idx, &cfg.imaging).context(|| format!("depth images of instance {}", inst.id))? {
                depth.images.push(sfi.pixels);
                depth.owner.push(idx);
                depth.augmented.push(false);
            }
            let copies = augment(&inst.inertial, &cfg.augment, derive_seed(cfg.seed, &[0xa06, idx as u64]))
                .context(|| format!("augmenting instance {}", inst.id))?;
            for (k, rec) in copies.iter().enumerate() {
                for si in build_signal_images(rec, &cfg.imaging).context(|| format!("signal images of instance {}", inst.id))? {
                    inertial.images.push(si.pixels);
                    inertial.owner.push(idx);
                    inertial.augmented.push(k > 0);
                }
            }
        }
        let mut modalities = vec![depth, inertial];
        if cfg.prewitt {
            let d = &modalities[0];
            modalities.push(ModalityImages {
                name: MODALITIES[2],
                images: d.images.iter().map(prewitt).collect(),
                owner: d.owner.clone(),
                augmented: d.augmented.clone(),
            });
        }
        Ok(Self {
            instances,
            classes,
            targets,
            modalities,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Instance indices (positions in [`Dataset::instances`]), both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: in each class, a seeded shuffle puts
/// `round(n · fraction)` instances in train, keeping at least one on each
/// side when the class has two or more.
pub fn make_split(targets: &[usize], fraction: f64, seed: u64) -> Split {
    let n_classes = targets.iter().max().map_or(0, |&m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == c).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let k = if n < 2 {
            n
        } else {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        };
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

/// Everything one split produces before the per-variant SVMs.
#[derive(Debug, Clone)]
pub struct SplitRun {
    pub models: Vec<CnnModel>,
    pub histories: Vec<TrainHistory>,
    pub train_samples: Vec<AlignedSample>,
    pub test_samples: Vec<AlignedSample>,
    /// Class index per aligned sample.
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    /// Per modality, activations gathered along the aligned samples.
    pub train_acts: Vec<StageActivations>,
    pub test_acts: Vec<StageActivations>,
    pub cnn_secs: Vec<f64>,
    pub extract_train_secs: Vec<f64>,
    pub extract_test_secs: Vec<f64>,
    pub stage_names: Vec<String>,
}

fn empty_acts(model: &CnnModel) -> Result<StageActivations> {
    let shapes = model.config().stage_shapes().context(|| "CNN shapes".into())?;
    Ok(StageActivations {
        stages: shapes.into_iter().map(|(h, w, c)| Tensor4::zeros(h, w, c, 0)).collect(),
    })
}

fn train_modality(
    data: &Dataset,
    m: usize,
    cnn_train: &[usize],
    val: &[usize],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(CnnModel, TrainHistory, f64)> {
    let start = Instant::now();
    let mod_ = &data.modalities[m];
    let mut config = cfg.cnn.clone();
    config.n_classes = data.n_classes();
    config.input_size = cfg.imaging.size;
    let mut model = CnnModel::init(config, seed).context(|| format!("{} CNN", mod_.name))?;
    let pick = |set: &[usize], with_aug: bool| -> (Vec<&Matrix2>, Vec<usize>) {
        (0..mod_.images.len())
            .filter(|&i| set.binary_search(&mod_.owner[i]).is_ok() && (with_aug || !mod_.augmented[i]))
            .map(|i| (&mod_.images[i], data.targets[mod_.owner[i]]))
            .unzip()
    };
    let (imgs, labels) = pick(cnn_train, true);
    let (vimgs, vlabels) = pick(val, false);
    let val_set = (!vimgs.is_empty()).then_some((vimgs.as_slice(), vlabels.as_slice()));
    let history = model
        .train(&imgs, &labels, val_set)
        .context(|| format!("training the {} CNN", mod_.name))?;
    Ok((model, history, start.elapsed().as_secs_f64()))
}

/// Trains the per-modality CNNs on `split.train`, extracts stage features
/// for train and test images and aligns them into fusible samples.
pub fn run_split(data: &Dataset, split: &Split, cfg: &ExperimentConfig, split_id: u64) -> Result<SplitRun> {
    let n_mod = data.modalities.len();
    let (cnn_train, val) = if cfg.val_fraction > 0.0 {
        let sub: Vec<usize> = split.train.iter().map(|&i| data.targets[i]).collect();
        let inner = make_split(&sub, 1.0 - cfg.val_fraction, derive_seed(cfg.seed, &[split_id, 0x7a1]));
        (
            inner.train.iter().map(|&k| split.train[k]).collect::<Vec<_>>(),
            inner.test.iter().map(|&k| split.train[k]).collect::<Vec<_>>(),
        )
    } else {
        (split.train.clone(), Vec::new())
    };
    let seeds: Vec<u64> = (0..n_mod)
        .map(|m| derive_seed(cfg.seed, &[split_id, 0xc22, m as u64]))
        .collect();

    let trained: Vec<Result<(CnnModel, TrainHistory, f64)>> = if cfg.threads > 1 && n_mod > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n_mod)
                .map(|m| {
                    let (ct, v, seed) = (&cnn_train, &val, seeds[m]);
                    s.spawn(move || train_modality(data, m, ct, v, cfg, seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        (0..n_mod)
            .map(|m| train_modality(data, m, &cnn_train, &val, cfg, seeds[m]))
            .collect()
    };
    let mut models = Vec::with_capacity(n_mod);
    let mut histories = Vec::with_capacity(n_mod);
    let mut cnn_secs = Vec::with_capacity(n_mod);
    for r in trained {
        let (model, history, secs) = r?;
        models.push(model);
        histories.push(history);
        cnn_secs.push(secs);
    }

    let chunk = cfg.cnn.batch_size;
    let mut raw_train = Vec::with_capacity(n_mod);
    let mut raw_test = Vec::with_capacity(n_mod);
    let mut owners_train = Vec::with_capacity(n_mod);
    let mut owners_test = Vec::with_capacity(n_mod);
    let (mut extract_train_secs, mut extract_test_secs) = (Vec::new(), Vec::new());
    for (m, mod_) in data.modalities.iter().enumerate() {
        let select = |set: &[usize], with_aug: bool| -> Vec<usize> {
            (0..mod_.images.len())
                .filter(|&i| set.binary_search(&mod_.owner[i]).is_ok() && (with_aug || !mod_.augmented[i]))
                .collect()
        };
        for (set, with_aug, raw, owners, secs) in [
            (&split.train, true, &mut raw_train, &mut owners_train, &mut extract_train_secs),
            (&split.test, false, &mut raw_test, &mut owners_test, &mut extract_test_secs),
        ] {
            let idx = select(set, with_aug);
            let start = Instant::now();
            let acts = if idx.is_empty() {
                empty_acts(&models[m])?
            } else {
                let imgs: Vec<&Matrix2> = idx.iter().map(|&i| &mod_.images[i]).collect();
                models[m]
                    .extract_images(&imgs, chunk)
                    .context(|| format!("{} feature extraction", mod_.name))?
            };
            secs.push(start.elapsed().as_secs_f64());
            raw.push(acts);
            owners.push(idx.iter().map(|&i| mod_.owner[i]).collect::<Vec<_>>());
        }
    }

    let align = |instances: &[usize], owners: &[Vec<usize>], raw: &[StageActivations], policy, tag: u64| -> Result<(Vec<AlignedSample>, Vec<StageActivations>)> {
        let refs: Vec<&[usize]> = owners.iter().map(Vec::as_slice).collect();
        let samples = pair_samples(instances, &refs, ANCHOR, policy, derive_seed(cfg.seed, &[split_id, tag]))
            .map_err(|e| Error::Core {
                context: format!("pairing ({policy})"),
                source: e,
            })?;
        let acts = raw
            .iter()
            .enumerate()
            .map(|(m, a)| gather(a, &samples, m).context(|| format!("gathering {}", data.modalities[m].name)))
            .collect::<Result<Vec<_>>>()?;
        Ok((samples, acts))
    };
    let (train_samples, train_acts) = align(&split.train, &owners_train, &raw_train, cfg.pairing, 0x9a1)?;
    let (test_samples, test_acts) = align(&split.test, &owners_test, &raw_test, cfg.eval_pairing, 0x9a2)?;
    let labels = |s: &[AlignedSample]| s.iter().map(|a| data.targets[a.instance]).collect::<Vec<_>>();
    let n_convs = cfg.cnn.convs.len();
    let mut stage_names: Vec<String> = (1..=n_convs).map(|i| format!("conv{i}")).collect();
    stage_names.push("fc1".into());
    Ok(SplitRun {
        models,
        histories,
        train_labels: labels(&train_samples),
        test_labels: labels(&test_samples),
        train_samples,
        test_samples,
        train_acts,
        test_acts,
        cnn_secs,
        extract_train_secs,
        extract_test_secs,
        stage_names,
    })
}

/// Fusion settings for a variant; unimodal variants flatten their single
/// modality.
pub fn fusion_settings(variant: Variant, cfg: &ExperimentConfig) -> FusionSettings {
    let mode = match variant {
        Variant::Fused(m) => m,
        Variant::Unimodal(_) => FusionMode::Concat,
    };
    let mut s = FusionSettings::new(mode, high_boost_kernel(cfg.boost));
    s.scope = cfg.scope;
    s.chunk = cfg.chunk;
    s.stages = cfg.stages.clone();
    s
}

/// Multimodal layer of a variant over already aligned activations.
pub fn variant_features(acts: &[StageActivations], variant: Variant, cfg: &ExperimentConfig, stage_names: &[String]) -> Result<MultimodalFeatures> {
    let names: Vec<&str> = stage_names.iter().map(String::as_str).collect();
    let settings = fusion_settings(variant, cfg);
    let inputs = match variant {
        Variant::Fused(_) => acts,
        Variant::Unimodal(m) => std::slice::from_ref(
            acts.get(m)
                .ok_or_else(|| Error::Config(format!("mode '{variant}' needs modality {m}")))?,
        ),
    };
    build_multimodal(inputs, &settings, &names).context(|| format!("building the {variant} multimodal layer"))
}

/// Outcome of one variant on one split.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
    pub train_secs: f64,
    pub infer_secs: f64,
    pub svm: SvmModel,
}

fn modalities_of(variant: Variant, n_mod: usize) -> Vec<usize> {
    match variant {
        Variant::Fused(_) => (0..n_mod).collect(),
        Variant::Unimodal(m) => vec![m],
    }
}

pub fn evaluate_variant(run: &SplitRun, variant: Variant, cfg: &ExperimentConfig, n_classes: usize, split_id: u64) -> Result<VariantResult> {
    let used = modalities_of(variant, run.models.len());
    let start = Instant::now();
    let x_train = variant_features(&run.train_acts, variant, cfg, &run.stage_names)?;
    let svm_cfg = SvmConfig {
        c: cfg.svm_c,
        epochs: cfg.svm_epochs,
        seed: derive_seed(cfg.seed, &[split_id, 0x5f3]),
        standardize: true,
    };
    let svm = train_svm(&x_train.data, &run.train_labels, &svm_cfg).context(|| format!("{variant} SVM"))?;
    drop(x_train);
    let fit_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let x_test = variant_features(&run.test_acts, variant, cfg, &run.stage_names)?;
    let predictions = if x_test.rows() == 0 {
        Vec::new()
    } else {
        svm.predict(&x_test.data).context(|| format!("{variant} prediction"))?
    };
    let predict_secs = start.elapsed().as_secs_f64();
    let m = metrics(&predictions, &run.test_labels, n_classes).context(|| format!("{variant} metrics"))?;
    let sum = |v: &[f64]| used.iter().map(|&i| v[i]).sum::<f64>();
    Ok(VariantResult {
        variant,
        accuracy: m.accuracy,
        confusion: m.confusion,
        predictions,
        train_secs: sum(&run.cnn_secs) + sum(&run.extract_train_secs) + fit_secs,
        infer_secs: sum(&run.extract_test_secs) + predict_secs,
        svm,
    })
}

/// NCC between the depth and inertial test activations at each convolution
/// stage. A stage that is constant in either modality (for instance a layer
/// whose ReLUs are all dead) has no defined NCC and is reported as NaN.
pub fn split_ncc(run: &SplitRun) -> Result<NccTable> {
    let n_convs = run.stage_names.len() - 1;
    let mut rows = Vec::with_capacity(n_convs);
    for s in 0..n_convs {
        let name = run.stage_names[s].as_str();
        let table = stage_ncc(&run.test_acts[0], &run.test_acts[ANCHOR], &[(s, name)]);
        let v = match table {
            Ok(t) => t.rows[0].1,
            Err(mgaf_core::Error::InvalidArgument(msg)) if msg.contains("zero variance") => f64::NAN,
            Err(e) => {
                return Err(Error::Core {
                    context: format!("{name} NCC"),
                    source: e,
                })
            }
        };
        rows.push((name.to_string(), v));
    }
    Ok(NccTable { rows })
}

/// Loads the configured dataset and runs every split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let instances = load_instances(cfg)?;
    run_experiment_on(instances, cfg)
}

pub fn run_experiment_on(instances: Vec<ActionInstance>, cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let data = Dataset::prepare(instances, cfg)?;
    let k = data.n_classes();
    let mut report = Report::new(cfg, data.classes.clone());
    for split_id in 0..cfg.splits {
        let sid = split_id as u64;
        let split = make_split(&data.targets, cfg.train_fraction, derive_seed(cfg.seed, &[sid, 0x5b1]));
        if k < 2 {
            // One class: every prediction is trivially right.
            let n_test = data.modalities[ANCHOR]
                .owner
                .iter()
                .zip(&data.modalities[ANCHOR].augmented)
                .filter(|(o, a)| !**a && split.test.binary_search(o).is_ok())
                .count();
            for &v in &cfg.modes {
                report.push(
                    ReportRow {
                        split: split_id,
                        mode: v.name(),
                        accuracy: 1.0,
                        train_minutes: 0.0,
                        infer_micros_per_sample: 0.0,
                    },
                    &[vec![n_test]],
                );
            }
            continue;
        }
        let run = run_split(&data, &split, cfg, sid).map_err(|e| with_split(e, split_id))?;
        report.histories.push(
            run.histories
                .iter()
                .enumerate()
                .map(|(m, h)| (data.modalities[m].name.to_string(), h.clone()))
                .collect(),
        );
        if !run.test_samples.is_empty() {
            report.ncc_per_split.push(split_ncc(&run).map_err(|e| with_split(e, split_id))?);
        }
        for &v in &cfg.modes {
            let r = evaluate_variant(&run, v, cfg, k, sid).map_err(|e| with_split(e, split_id))?;
            let n = run.test_samples.len().max(1) as f64;
            report.push(
                ReportRow {
                    split: split_id,
                    mode: v.name(),
                    accuracy: r.accuracy,
                    train_minutes: r.train_secs / 60.0,
                    infer_micros_per_sample: r.infer_secs * 1e6 / n,
                },
                &r.confusion,
            );
        }
    }
    Ok(report)
}

fn with_split(e: Error, split: usize) -> Error {
    match e {
        Error::Core { context, source } => Error::Core {
            context: format!("split {split}: {context}"),
            source,
        },
        other => other,
    }
}
